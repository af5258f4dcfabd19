"""python -m disaqa delegates to the CLI."""

from .cli import main

raise SystemExit(main())
