import sys

from overlearn.cli import main

sys.exit(main())
