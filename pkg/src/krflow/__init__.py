"""Radial Kähler-Ricci flow laboratory.

Solvers for the complex Monge-Ampère flows behind the Kähler-Ricci flow on
U(n)-invariant strictly pseudoconvex domains, an elliptic oracle for the limit
Kähler-Einstein metric, and validators for the a-priori estimates.
"""

__version__ = "0.1.0"
