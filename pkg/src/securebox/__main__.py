"""Allow running as `python -m securebox`."""
import sys

from .cli import main

sys.exit(main())
