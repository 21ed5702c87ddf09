"""Semi-discrete variational chains for 1+1D field theories.

Builds the node-chain ODE system generated by a two-node Lagrangian,
integrates it with structure-preserving steppers, and provides diagnostics
for the geometric invariants (energy, momentum maps, discrete symplectic
form) and the pointwise constraint algorithm for degenerate chains.
"""

__version__ = "0.1.0"
