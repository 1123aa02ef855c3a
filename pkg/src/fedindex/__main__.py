import sys

from fedindex.cli import main

sys.exit(main())
