import sys

from wafertex.cli import main

sys.exit(main())
