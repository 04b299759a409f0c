import sys

from relisten.cli import main

sys.exit(main())
