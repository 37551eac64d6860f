import os
import sys

import numpy as np

from dbsmeta.metrics import read_summaries


def main():
    """Output score list of finished runs.

    Walks a run directory, reads every ``summary.toml`` and ranks the runs by
    final team utility (largest first). Runs with a known optimum (an
    ``oracle`` run of the same tree) are also reported as a ratio to it.

    Parameters
    ----------
    run_root : str
        Output directory of an experiment, passed as first command line argument
    output_num : int, optional
        Number of top-scoring runs to output (default: all)

    Returns
    -------
    None
        Writes results to score_list.csv in the current directory and prints to stdout
    """
    args = sys.argv
    if len(args) == 2:
        run_root = args[1]
        output_num = None
    elif len(args) == 3:
        run_root = args[1]
        output_num = int(args[2])
    else:
        print("Usage: output_score_list [run_root] [output_num]")
        print("output_num: number of runs to output in score list (default all)")
        exit(1)

    if not os.path.isdir(run_root):
        print("Directory not found: {}".format(run_root))
        exit(1)

    summaries = [s for s in read_summaries(run_root) if "final_G" in s and "algo" in s]
    if not summaries:
        print("No summary.toml with final_G found under {}".format(run_root))
        exit(1)

    # Optimum from oracle runs, if any
    optimum = [s["G_star"] for s in summaries if s["algo"] == "oracle" and "G_star" in s]
    g_star = max(optimum) if optimum else None

    scores = np.array([s["final_G"] for s in summaries], dtype=np.float64)
    score_list = np.argsort(-scores, kind="stable")
    if output_num is not None:
        score_list = score_list[:output_num]

    with open("score_list.csv", "w") as fw:
        str_header = "#rank, algo, seed, final_G, ratio_to_optimum, run_dir"
        print(str_header)
        fw.write(str_header + "\n")
        for rank, idx in enumerate(score_list):
            s = summaries[idx]
            ratio = "" if not g_star else "{:.6f}".format(scores[idx] / g_star)
            str_score = "{}, {}, {}, {}, {}, {}".format(rank + 1, s["algo"], s.get("seed", ""), scores[idx], ratio,
                                                        os.path.relpath(s["run_dir"], run_root))
            print(str_score)
            fw.write(str_score + "\n")


if __name__ == "__main__":
    main()
