"""Mean field equilibrium of a Proof-of-Work mining game.

Modules: ``protocol`` (reward arithmetic), ``market`` (price, utility, fits),
``grid``, ``hjb``, ``fokker_planck``, ``equilibrium``, ``montecarlo``,
``analysis`` and ``cli``.
"""

__version__ = "0.1.0"
