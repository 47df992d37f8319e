import sys

from gazecnn.cli import main

sys.exit(main())
