"""A scaling backdoor against plain averaging, and what the RKD server does about it.

Ten clients hold Non-IID shards of a 4-class blob dataset. Four of them stamp a
2-pixel trigger onto half their samples, relabel those to class 0, and multiply
their update by 10 before sending it. We train twice from the same seed, once
with FedAvg and once with RKD, and print the clean accuracy (MTA) and the
fraction of triggered test points sent to class 0 (ASR) as rounds go by.

    python demos/01_scaling_attack.py
"""
from pathlib import Path

from rkd import load_config, run_experiment

FIXTURE = Path(__file__).resolve().parent.parent / "tests" / "fixtures" / "desk_blobs.toml"

cfg = load_config(FIXTURE)
print(f"{cfg.n_clients} clients, {cfg.n_malicious} malicious, gamma={cfg.attack.gamma}, "
      f"alpha={cfg.alpha}, {cfg.rounds} rounds\n")

runs = {kind: run_experiment(cfg.replace(**{"aggregator.kind": kind})) for kind in ("fedavg", "rkd")}

print("round   fedavg mta  asr    rkd mta  asr    rkd ensemble")
for a, b in zip(runs["fedavg"], runs["rkd"]):
    print(f"{a.round:5d}   {a.mta:10.3f} {a.asr:5.3f}  {b.mta:8.3f} {b.asr:5.3f}    {b.ensemble}")

# The attackers are clients 0..3. Once they are flagged they never get the
# new global model back (exclusion dispatch), so they keep drifting away and
# stay easy to spot in later rounds.
flagged = sum(not set(r.malicious_clients) & set(r.benign_set) for r in runs["rkd"])
print(f"\nrounds where every attacker was kept out of the benign cluster: {flagged}/{cfg.rounds}")
