"""Launcher: ``python app.py <command> ...`` is the same as ``weightshare <command> ...``."""

import sys

from weightshare.main import main

if __name__ == "__main__":
    sys.exit(main())
