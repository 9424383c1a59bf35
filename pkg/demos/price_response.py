"""Price response of each feeder in a generated system at hour 0."""
import numpy as np

from tsodso.opf import solve_distribution
from tsodso.scenario import ScenarioConfig, generate_scenario

system = generate_scenario(ScenarioConfig(horizon=24), seed=0)
prices = np.linspace(system.lambda_lo, system.lambda_hi, 7)
print("price  " + "  ".join(f"{h:>8}" for h in sorted(system.distribution)))
for p in prices:
    row = [solve_distribution(system.distribution[h], 0, p, system).pn for h in sorted(system.distribution)]
    print(f"{p:5.1f}  " + "  ".join(f"{v:8.3f}" for v in row))
