"""Subcommand modules for the seqsr command line."""
