import sys

from artipose.cli import main

sys.exit(main())
