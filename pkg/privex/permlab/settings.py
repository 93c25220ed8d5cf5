"""
Package-wide settings, read from the environment (and ``.env`` once the entry point has called
:func:`dotenv.load_dotenv`).

Every setting can be overridden by exporting the matching ``PERMLAB_`` environment variable, e.g.
``PERMLAB_SEED=42 permlab train ...``.
"""
import logging
from os import getenv as env

from privex.helpers import empty, env_bool, env_int
from privex.loghelper import LogHelper

#: Fallback seed for every command which doesn't receive ``--seed`` or ``seed=`` from a config file
DEFAULT_SEED = env_int('PERMLAB_SEED', 0)

#: Gain used by ``permlab construct`` when ``--beta`` is omitted
DEFAULT_BETA = float(env('PERMLAB_BETA', '50'))

#: Max-abs error below which a construction counts as recovering ``Y``
DEFAULT_TOL = float(env('PERMLAB_TOL', '1e-6'))

#: Binary targets differ by 1 where they differ, so 0.25 cleanly separates "matches Y" from "matches Y'"
WITNESS_TOL = float(env('PERMLAB_WITNESS_TOL', '0.25'))

#: When true, the CLI only prints results and errors - no progress chatter
QUIET = env_bool('PERMLAB_QUIET', False)

LOG_FORMATTER = logging.Formatter('[%(asctime)s]: %(name)-35s -> %(funcName)-20s : %(levelname)-8s:: %(message)s')

LOG_LEVEL = logging.getLevelName(env('PERMLAB_LOG_LEVEL', 'WARNING').upper())

LOG_FILE = env('PERMLAB_LOG_FILE', None)

_lh = LogHelper('privex.permlab', formatter=LOG_FORMATTER, handler_level=LOG_LEVEL)

_lh.add_console_handler()

if not empty(LOG_FILE):
    _lh.add_file_handler(LOG_FILE)


def set_log_level(level: int):
    """Change the level of the ``privex.permlab`` logger and all of its handlers (used by ``-v`` / ``-vv``)."""
    logger = logging.getLogger('privex.permlab')
    logger.setLevel(level)
    for h in logger.handlers:
        h.setLevel(level)
