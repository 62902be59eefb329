import sys

from diffplan.cli import main

sys.exit(main())
