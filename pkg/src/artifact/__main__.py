import sys

from .xcli import main

sys.exit(main())
