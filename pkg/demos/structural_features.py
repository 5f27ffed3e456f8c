"""Structural features of a small directed graph, and why the kernel is safe to use.

Run: python demos/structural_features.py
"""
import numpy as np
import torch

from gtlm.bias import BiasConfig, count_parameters, deepset_phi, init_bias_params, mag_kernel
from gtlm.features import compute_features
from gtlm.graph import make_graph
from gtlm.verification import complete_graph, oracle_kernel_invariance, perturb_basis

np.set_printoptions(precision=3, suppress=True)

# A 3-cycle a -> b -> c -> a with a tail c -> d.
g = make_graph(["a", "b", "c", "d"], [(0, 1), (1, 2), (2, 0), (2, 3)])
f = compute_features(g, max_spd=8, K=4, q=0.25)

print("shortest-path buckets (undirected view):")
print(f.spd)

# rrwp[u, v, k] is the probability that a k-step walk from u ends at v;
# d has no out-edges, so walks that reach it stop there.
print("\n2-step walk probabilities:")
print(f.rrwp[:, :, 2])

# The magnetic Laplacian is Hermitian; the imaginary parts of its
# eigenvectors carry edge direction.
print("\nmagnetic Laplacian eigenvalues:", f.mag_eigvals)

# Eigenvectors are only defined up to a phase per column (and up to a unitary
# within a repeated eigenvalue). The kernel V diag(phi) V^H does not care.
params = init_bias_params(BiasConfig(n_layers=1, n_heads=1), seed=0)
with torch.no_grad():
    phi = deepset_phi(torch.as_tensor(f.mag_eigvals), params)
    k0 = mag_kernel(f.mag_eigvecs, phi)
    rotated = perturb_basis(f.mag_eigvecs, f.mag_eigvals, "phase", np.random.default_rng(1))
    k1 = mag_kernel(rotated, phi)
print("\nkernel change under random eigenvector phases:", float((k1 - k0).abs().max()))

# The same check on the complete graph K4, whose spectrum is degenerate.
rep = oracle_kernel_invariance(complete_graph(4))
print("K4 degenerate blocks:", rep["degenerate_blocks"])
for mode in ("phase", "block", "nonunitary"):
    print(f"  {mode:>10}: max|dK| = {rep[mode]['max_abs_delta']:.2e}  invariant={rep[mode]['invariant']}")

# How many bias parameters a larger configuration would carry.
print("\nparameters for 16 layers x 32 heads:", count_parameters(BiasConfig(n_layers=16, n_heads=32)))
