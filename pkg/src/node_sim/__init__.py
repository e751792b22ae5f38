"""Desk-scale simulation and analysis of a spin-photon entanglement node.

Subpackages by concern:

* ``qcore``    exact two-qubit linear algebra and conventions
* ``cavity``   closed-form cavity-QED efficiency budget
* ``jones``    polarisation path model and calibration fits
* ``sequence`` Monte Carlo engine for the experimental sequence
* ``tomo``     estimators: tomography, bounds, curve fits
* ``analysis`` summary-to-report pipeline
* ``cli``      command-line front end (``node-sim``)
"""

__version__ = "0.1.0"

from . import analysis, cavity, config, jones, presets, qcore, sequence, tomo  # noqa: F401,E402
