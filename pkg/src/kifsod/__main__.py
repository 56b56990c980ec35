import sys

from kifsod._cli import main

sys.exit(main())
