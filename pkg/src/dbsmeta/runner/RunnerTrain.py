import logging
import os

import numpy as np

from ..baselines import BaselineKind, iac_init, iac_train, pretrain_init
from ..checkpoint import save_params
from ..meta import meta_task_stream
from ..vdrl import greedy_trajectory, train
from .RunnerBase import RunnerBase

logger = logging.getLogger(__name__)


class RunnerTrain(RunnerBase):
    """Training run on the fixed realization: vdrl, vdrl-unscaled, iac or pretrain.

    ``pretrain`` first trains sequentially on the tasks of the matching meta
    run, then trains on the realization from the result.
    """

    def _initial_params(self, rng):
        if self.algo == BaselineKind.IAC.value:
            return iac_init(self.world, rng, self.spec.hidden, self.spec.activation)
        init = self.random_init(rng)
        if self.algo == BaselineKind.PRETRAINED_VDRL.value:
            meta_cfg = self.spec.meta_config(self.seed)
            stream = meta_task_stream(self.world, self.spec.tasks, self.seed, meta_cfg.meta_iterations,
                                      meta_cfg.tasks_per_iteration)
            tasks = [z for batch in stream for z in batch]
            per_task = int(self.spec.section("pretrain")["iterations_per_task"])
            logger.info("pretrain on %d tasks, %d iterations each", len(tasks), per_task)
            init = pretrain_init(self.world, tasks, init, self.train_config(per_task), rng)
            save_params(os.path.join(self.run_dir, "init.h5"), init, kind="pretrain")
        return init

    def _execute(self):
        rng = np.random.default_rng(self.seed)
        init = self._initial_params(rng)
        cfg = self.train_config()
        trainer = iac_train if self.algo == BaselineKind.IAC.value else train
        result = trainer(self.world, self.z, init, cfg, rng, checkpoint=self.checkpoint_hook(self.algo))
        self.write_metrics(result.metrics_frame())
        save_params(os.path.join(self.run_dir, "params.h5"), result.params, kind=self.algo,
                    schedules={"value": cfg.value_schedule, "policy": cfg.policy_schedule})
        _, outcome = greedy_trajectory(self.world, self.z, result.params)
        self.write_episode(outcome)
        summary = self.train_summary(result, cfg)
        summary["greedy_G"] = outcome.utility
        return summary
