"""Semi-supervised outage localization on a simulated 3-machine power grid.

Three dense networks (student classifier, EMA teacher, latent encoder/decoder)
trained by an EM-style loop under swing-equation constraints, plus a
mean-teacher / pseudo-label baseline for comparison.
"""

__version__ = "0.1.0"
