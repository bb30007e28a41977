"""Shipped experiment presets (INI text, same schema as user configs).

Common to all: two users, 2 MHz bandwidth, C_tot = 10 bits/sec/Hz, cross-link
path loss one order of magnitude below the direct links.

The fig2 sweep is 10% to 107% of the fixed-power capacity at p_max,
lambda_1 ~= 2.857e6 bits/sec with lambda_2 = 1e6, found with
``cran-delay probe --preset fig2``; it is denser near that capacity.
"""

_CLUSTER = """
[cluster]
n = 2
W = 2e6
tau = 1e-3
sigma2 = 0.01
C_tot = 10
L = 1, 0.1; 0.1, 1
p0 = 0.1
p_max = 0.2
lam = 1e6
beta = 1
seed = 0
"""

PRESETS = {
    "fig2": _CLUSTER + """
[experiment]
type = average
policies = joint, fixed_power
T = 20000
burn_in = 2000
trials = 20
sweep_name = lam1
sweep_values = 285700, 1143000, 2000000, 2572000, 2857000, 2950000, 3050000
""",
    "fig3": _CLUSTER + """
[experiment]
type = average
policies = joint, fixed_power
T = 20000
burn_in = 2000
trials = 20
sweep_name = C_tot
sweep_values = 8, 10, 12, 14, 16, 18
""",
    "fig4": _CLUSTER + """
[experiment]
type = finite
horizon = geometric
trials = 50
sweep_name = mu
sweep_values = 0.5, 0.7, 0.8, 0.9, 0.95, 0.98
""",
    "pareto": _CLUSTER + """
[experiment]
type = pareto
T = 20000
burn_in = 2000
trials = 20
tune_corrections = 6
beta_grid = 1, 0.05; 1, 0.25; 1, 0.5; 1, 1; 0.5, 1; 0.25, 1; 0.05, 1
""",
}
