import sys

from mipl_cdl.cli import main

sys.exit(main())
