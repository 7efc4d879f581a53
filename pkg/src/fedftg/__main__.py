import sys

from fedftg.cli import main

sys.exit(main())
