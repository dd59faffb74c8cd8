# pyright: basic
"""Tests for __main__ module."""

import sys
from unittest.mock import patch


def test_main_module():
    """Test that __main__ module can be imported without running the CLI."""
    # Remove the module if it was previously imported
    if "attrdet.__main__" in sys.modules:
        del sys.modules["attrdet.__main__"]

    with patch("attrdet.main.cli") as mock_cli:
        import attrdet.__main__  # noqa: F401

        # cli() only runs when executed as a script
        mock_cli.assert_not_called()
