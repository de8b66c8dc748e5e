import sys

from mdprobe.cli import main

sys.exit(main())
