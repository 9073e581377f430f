"""Route a few tokens through one HMoLE module.

Shows that the token projection stays the same size whatever the number of
experts, that fresh experts leave the frozen projection untouched, and how
top-k selection uses the raw softmax weights.
"""

import numpy as np

from fedamole.hmole import HMoLEModuleState, LoRAExpert, SharedExpert, TokenProjection, hmole_forward, route_token

rng = np.random.default_rng(0)
d, r = 16, 4
W = rng.normal(size=(d, d)) / np.sqrt(d)
h = rng.normal(size=(3, d))

for n_experts in (2, 5):
    experts = [LoRAExpert.create(j, d, d, r, 16 / r, rng) for j in range(n_experts)]
    state = HMoLEModuleState(
        "layer0.q", experts, top_k=2, projection=TokenProjection.create(d, r, rng), shared=SharedExpert.create(d, d, r, 16 / r, rng)
    )
    out = hmole_forward(state, W, h)
    print(f"{n_experts} experts: router shape {state.projection.W.shape}")
    print("  fresh module equals W h:", np.array_equal(out.y.data, h @ W.T))
    decision = route_token(state, h[0])
    print("  token 0 probabilities:", np.round(decision.probs, 3), "-> selected", decision.selected)
