import logging
import os
import sys

from dotenv import load_dotenv

from cli import PipelineCli


def configure_logging(verbose: bool = False) -> None:
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(asctime)s | %(name)s | %(levelname)s | %(message)s",
    )


def get_upsample_timeout() -> float | None:
    load_dotenv()
    raw = (os.getenv("SEQSR_UPSAMPLE_TIMEOUT") or "").strip()
    if not raw:
        return None
    try:
        timeout = float(raw)
    except ValueError as exc:
        raise RuntimeError(f"SEQSR_UPSAMPLE_TIMEOUT must be a number of seconds, got {raw!r}") from exc
    if timeout <= 0:
        raise RuntimeError(f"SEQSR_UPSAMPLE_TIMEOUT must be positive, got {raw!r}")
    return timeout


def main(argv: list[str] | None = None) -> int:
    cli = PipelineCli(upsample_timeout=get_upsample_timeout())
    args = cli.parse(argv)
    configure_logging(args.verbose)
    return cli.dispatch(args)


if __name__ == "__main__":
    sys.exit(main())
