"""Exact symbolic tools for Frobenius-type structures with non-flat unity:

hierarchy construction, tau structure, Virasoro operators, loop-equation
solving genus by genus, and dispersive verification against lattice
hierarchies (Volterra, q-deformed KdV, Ablowitz-Ladik).
"""

__version__ = "0.1.0"
