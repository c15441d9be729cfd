import sys

from hsidiff.cli import main

sys.exit(main())
