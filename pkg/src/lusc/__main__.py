import sys

from lusc.cli import main

sys.exit(main())
