from fedzsl.cli import main

raise SystemExit(main())
