import sys

from ldif.cli import main

sys.exit(main())
