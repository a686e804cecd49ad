import sys

from connlearn.cli import main

sys.exit(main())
