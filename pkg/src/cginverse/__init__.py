"""Compound-Gaussian toolkit for linear inverse problems y = Psi*Phi*c + noise.

Subpackages:
    model    -- forward operators (Radon / Gaussian sensing, wavelet / DCT
                dictionaries) and measurement synthesis
    prior    -- compound-Gaussian nonlinearities, sampling, curvature terms
    solver   -- block-coordinate regularized least squares (gradient / Newton /
                quadratic-metric descent) with Tikhonov coefficient updates
    net      -- the unrolled trainable network mirroring the solver, with
                hand-written reverse-mode adjoints and Adam training
    metrics  -- SSIM / PSNR and 99% confidence intervals
    theory   -- executable certification of the solver's convergence theory
    cli      -- command-line entry points
"""

__version__ = "0.1.0"
