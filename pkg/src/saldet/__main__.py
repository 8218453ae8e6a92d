"""``python -m saldet``."""
import sys

from .cli import main

sys.exit(main())
