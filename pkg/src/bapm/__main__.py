from bapm.cli import main

raise SystemExit(main())
