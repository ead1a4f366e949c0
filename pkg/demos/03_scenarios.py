"""
Attack scenarios
================

Each shipped scenario mints a token on a simulated device, runs a scripted
model against the gateway and compares the decisions with the expected table.
"""

from encprompt.scenario_sim import fuzz_adversary, run_scenario, shipped_scenarios

for spec in shipped_scenarios():
    report = run_scenario(spec)
    print(report.render())
    if spec.description:
        print("   ", spec.description)

# Randomised adversaries: tampered, replayed, expired or missing tokens and
# arbitrary call sequences. Every tool run is checked by a separate oracle.
print()
print("fuzz violations:", fuzz_adversary(1000, seed=1))
