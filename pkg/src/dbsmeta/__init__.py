from . import world
from . import sim
from . import approx
from . import vdrl
from . import meta
from . import baselines
from . import job

__version__ = "0.1.0"
