from pcamil.cli import main

main()
