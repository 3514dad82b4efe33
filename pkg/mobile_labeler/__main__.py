from mobile_labeler.cli import main

main()
