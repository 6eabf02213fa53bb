import sys

from alphafair.cli import main

sys.exit(main())
