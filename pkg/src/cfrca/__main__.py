import sys

from cfrca.cli import main

sys.exit(main())
