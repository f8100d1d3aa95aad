import sys

from mvclip.cli import main

sys.exit(main())
