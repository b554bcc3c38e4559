import sys

from dtcs.cli import main

sys.exit(main())
