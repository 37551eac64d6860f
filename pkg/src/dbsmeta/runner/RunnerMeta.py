import logging
import os
from dataclasses import replace

import numpy as np

from ..checkpoint import save_params
from ..meta import meta_train
from ..vdrl import greedy_trajectory, train
from .RunnerBase import RunnerBase

logger = logging.getLogger(__name__)


class RunnerMeta(RunnerBase):
    """Meta-train an initialization, then train on the fixed realization from it."""

    def _execute(self):
        rng = np.random.default_rng(self.seed)
        init = self.random_init(rng)
        meta_cfg = self.spec.meta_config(self.seed)
        if not self.progress and meta_cfg.progress:
            meta_cfg = replace(meta_cfg, progress=False)
        logger.info("meta-train: %d iterations, %d tasks each, %s gradient", meta_cfg.meta_iterations,
                    meta_cfg.tasks_per_iteration, meta_cfg.mode.value)
        meta_result = meta_train(self.world, self.spec.tasks, init, meta_cfg, rng)
        self.write_metrics(meta_result.history_frame(), name="meta_metrics.csv")
        save_params(os.path.join(self.run_dir, "init.h5"), meta_result.params, kind="meta")

        cfg = self.train_config()
        result = train(self.world, self.z, meta_result.params, cfg, rng, checkpoint=self.checkpoint_hook("meta"))
        self.write_metrics(result.metrics_frame())
        save_params(os.path.join(self.run_dir, "params.h5"), result.params, kind="meta",
                    schedules={"value": cfg.value_schedule, "policy": cfg.policy_schedule})
        _, outcome = greedy_trajectory(self.world, self.z, result.params)
        self.write_episode(outcome)
        summary = self.train_summary(result, cfg)
        summary["greedy_G"] = outcome.utility
        history = meta_result.history
        if history:
            summary["final_L_c"] = history[-1]["L_c"]
            summary["final_L_a"] = history[-1]["L_a"]
        return summary
