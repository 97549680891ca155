import sys

from charprop.cli import main

sys.exit(main())
