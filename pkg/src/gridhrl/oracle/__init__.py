"""Independent oracles: brute-force checks for the planner, tabular MDP
solvers for the hierarchical-optimality claim, partition refinement for
exact bisimulation, and finite-difference gradients."""
