"""Allows running the CLI as ``python -m privex.permlab``"""
import sys

from privex.permlab.cli import main

if __name__ == '__main__':
    sys.exit(main())
