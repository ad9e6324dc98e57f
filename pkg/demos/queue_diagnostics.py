"""Watch the OOD memory queue and the self-adjusting OOD threshold during training.

Run from the repository root:  python3 demos/queue_diagnostics.py
"""
from osslab.data import AugmentConfig, BatchStream, SplitConfig, make_synthetic_openset, split_open_set
from osslab.diffcore import SgdConfig
from osslab.scomatch import ScoMatchConfig, init_scomatch_state, train_iteration

data = make_synthetic_openset(4, 2, 16, 8.0, 600, seed=1, cluster_std=2.0)
labeled, unlabeled, _ = split_open_set(data, SplitConfig(4, 25, 2000, 0.3, seed=1))

cfg = ScoMatchConfig(K=4, B=32, mu=7, N_m=32)
state = init_scomatch_state(cfg, 16, seed=1, hidden=(64, 64), sgd=SgdConfig())
batches = BatchStream(len(labeled), len(unlabeled), cfg.B, cfg.mu, state.rngs["batching"])
aug = AugmentConfig()

# Each iteration pushes the K_m unlabeled samples with the lowest ID confidence.
# Early on the network is uncertain everywhere, so the queue holds a mix of ID and OOD points.
print(" iter  queue  purity  tau_ood  accepted_id  accepted_ood  wrong")
for t in range(600):
    li, ui = next(batches)
    r = train_iteration(state, labeled.features[li], labeled.labels[li], unlabeled.features[ui],
                        cfg, aug, u_truth=unlabeled.labels[ui])
    if t < 5 or (t + 1) % 60 == 0:
        purity = "  -  " if r.queue_purity is None else f"{r.queue_purity:.3f}"
        print(f"{t + 1:5d}  {r.queue_len:5d}  {purity}  {r.tau_ood:7.3f}  {r.n_accept_id:11d}  "
              f"{r.n_accept_ood:12d}  {r.pseudo_wrong:5d}")

# The queue stores raw features, so its content can be inspected directly.
tags = state.queue.tags()
print("final queue:", len(tags), "entries,", sum(t == cfg.K for t in tags), "truly OOD")
print("controller counters: id", round(state.controller.count_id, 1),
      "ood", round(state.controller.count_ood, 1))
