"""Entry point for the attrdet package when run as a module."""

from .main import cli

if __name__ == "__main__":
    cli()
