"""
In-process entry point for the `vasa` command.

run_cli(['segment', 'cat.png', 'the cat head']) behaves like
`python manage.py vasa segment cat.png "the cat head"` and returns the
exit code instead of leaving the interpreter: 0 on success, 1 on a
runtime failure, 2 on a usage error.
"""

from harness.management.commands.vasa import Command


def run_cli(argv, stdout=None, stderr=None) -> int:
    command = Command(stdout=stdout, stderr=stderr)
    try:
        command.run_from_argv(['manage.py', 'vasa', *argv])
    except SystemExit as exc:
        if exc.code is None:
            return 0
        return exc.code if isinstance(exc.code, int) else 1
    return 0
