"""Experts choose clients.

Client and expert embeddings are scored, softmaxed over clients, and the
constrained assignment is solved exactly. The brute-force search agrees.
"""

import numpy as np

from fedamole.rsea import AssignmentProblem, enumerate_oracle, objective, relevance, selection_probabilities, solve_assignment

rng = np.random.default_rng(1)
C, E, r, d = 4, 5, 4, 32
client_emb = rng.normal(size=(C, r))
expert_emb = rng.normal(size=(E, r))

P = selection_probabilities(relevance(client_emb, expert_emb, d))
print("selection probabilities (rows: clients, columns: experts)")
print(np.round(P, 3))

problem = AssignmentProblem(P, k_e=1, k_c=2, b=3)
D = solve_assignment(problem)
print("\nassignment (each expert on 2 clients, each client holds 1 to 3 experts)")
print(D)
oracle, value = enumerate_oracle(problem)
print(f"\nobjective {objective(P, D):.6f}; brute force {float(value):.6f}; same matrix: {np.array_equal(D, oracle)}")
