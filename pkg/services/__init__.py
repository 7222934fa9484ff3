"""
services — moduli di dominio del runtime di ragionamento collettivo.
"""

__version__ = "1.0.0"
