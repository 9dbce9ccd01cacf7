"""Module entry point: ``python -m ridgeiv``."""

import sys

from ridgeiv.cli import main

sys.exit(main())
