import logging

from ..sim import enumerate_optimal, run_episode
from .RunnerBase import RunnerBase

logger = logging.getLogger(__name__)


class RunnerOracle(RunnerBase):
    """Brute-force optimum of the fixed realization."""

    def _execute(self):
        oracle = self.spec.section("oracle")
        best, argmax = enumerate_optimal(self.world, self.z, cap=int(oracle["cap"]), workers=int(oracle["workers"]),
                                         progress=self.progress)
        logger.info("oracle: G* = %.6f with %d maximizers", best, len(argmax))
        self.write_episode(run_episode(self.world, self.z, argmax[0]))
        return {
            "final_G": best,
            "G_star": best,
            "argmax_count": len(argmax),
            "trajectory": [list(row) for row in argmax[0]],
        }
