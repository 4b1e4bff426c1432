import sys

from rollbundle.cli import main

sys.exit(main())
