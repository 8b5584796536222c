import sys

from uwbalign.cli import main

sys.exit(main())
