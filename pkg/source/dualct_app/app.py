import sys

from dualct.cli import main
from dualct.messages import dump_messages

if __name__ == "__main__":
    try:
        code = main(sys.argv[1:])
    except Exception:
        dump_messages()
        raise
    if code != 0:
        dump_messages()
    sys.exit(code)
