"""Allow ``python3 -m taskdb``."""

import sys

from taskdb.cli import main

sys.exit(main())
