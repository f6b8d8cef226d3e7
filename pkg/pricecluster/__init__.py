# Price clustering model: double Poisson mixture, score-driven dynamics, estimation
__version__ = "0.1.0"
