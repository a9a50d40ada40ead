import sys

from dualsync.cli import main

sys.exit(main())
