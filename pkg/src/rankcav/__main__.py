from rankcav.cli import main

raise SystemExit(main())
