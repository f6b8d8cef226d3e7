# Services: distributions, dynamics, estimation, data pipeline
