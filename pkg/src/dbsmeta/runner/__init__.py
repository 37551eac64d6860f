from .RunnerBase import RunnerBase
from .RunnerMeta import RunnerMeta
from .RunnerOracle import RunnerOracle
from .RunnerTrain import RunnerTrain
