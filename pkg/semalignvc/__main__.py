import sys

from semalignvc.cli import main

sys.exit(main())
