# qpimaging.sim package: optics, density-matrix exponentiation, QSP filtering,
# measurement procedure and the classical baseline
