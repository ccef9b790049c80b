"""
physnet3d entry point
Run `python app.py --help` for the list of commands
"""

import sys

from physnet3d.cli import main

if __name__ == "__main__":
    sys.exit(main())
