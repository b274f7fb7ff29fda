"""Command-line pipeline: run configuration and subcommands."""
