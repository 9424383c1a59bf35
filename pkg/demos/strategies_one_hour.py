"""Compare the four coordination strategies on one test hour."""
from tsodso.coord import Strategy, evaluate_hour
from tsodso.experiment import build_history
from tsodso.grid import scale_impedances
from tsodso.scenario import ScenarioConfig, generate_scenario

base = generate_scenario(ScenarioConfig(horizon=200), seed=0)
system = scale_impedances(base, 1.33)
hist = build_history(system, range(168))
hour = 180
bn = evaluate_hour(Strategy("BN"), system, hour)
for tag in ("BN", "SB", "PAG", "PAW"):
    r = evaluate_hour(Strategy(tag, k=30, blocks=10), system, hour, hist)
    loss = 100 * (bn.sw_total - r.sw_total) / abs(bn.sw_total)
    print(f"{tag:4} imbalance {r.delta_pct:7.3f} %   welfare loss {loss:8.5f} %")
