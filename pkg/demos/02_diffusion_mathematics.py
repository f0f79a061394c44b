"""
Forward diffusion, its closed-form marginal, and the ELBO
=========================================================

The forward chain adds Gaussian noise step by step; its t-step marginal has a
closed form, and simulating the chain must agree with it. On a 1-D
linear-Gaussian toy the exact log-likelihood is available, so the variational
bound can be checked against the thing it bounds.
"""

import numpy as np

from roomdiff import build_schedule, elbo, forward_marginal
from roomdiff.diffusion_process import forward_step
from roomdiff.tensor_core import Rng

schedule = build_schedule(T=100)
rng = Rng(0)

# simulate the chain to t=60 many times and compare moments with the marginal
z0 = np.array([1.5])
t_probe, trials = 60, 4000
chain_samples, marginal_samples = [], []
for i in range(trials):
    z = z0
    for t in range(1, t_probe + 1):
        z = forward_step(z, t, schedule, rng.spawn("chain", i, t))
    chain_samples.append(np.asarray(z)[0])
    zm, _ = forward_marginal(z0, t_probe, schedule, rng.spawn("marg", i))
    marginal_samples.append(np.asarray(zm)[0])
chain, marg = np.array(chain_samples), np.array(marginal_samples)
want_mean = np.sqrt(schedule.abar(t_probe)) * z0[0]
print(f"analytic mean {want_mean:.4f} | chain {chain.mean():.4f} | marginal {marg.mean():.4f}")
print(f"analytic var  {1 - schedule.abar(t_probe):.4f} | chain {chain.var():.4f} | marginal {marg.var():.4f}")

# a short fat-noise schedule where every term of the bound matters
toy = build_schedule(3, 0.90, 0.99)


def optimal_linear_denoiser(z, t):
    # for unit-variance data the best linear noise estimate is sqrt(1-abar)*z
    return np.sqrt(1.0 - toy.abar(t)) * z


def chain_loglik(x):
    # variance of z0 after the full noising chain, accumulated in closed form
    var = 1.0
    for t in range(toy.T, 0, -1):
        if t >= 2:
            step = toy.bt(t) * (1 - toy.abar(t - 1)) / (1 - toy.abar(t))
        else:
            step = toy.bt(1)
        var = toy.at(t) * var + step
    return -0.5 * np.log(2 * np.pi * var) - x**2 / (2 * var)


rng = Rng(1)
gaps = []
for i in range(48):
    x = rng.spawn("data", i).normal((1,))
    report = elbo(x, optimal_linear_denoiser, toy, rng.spawn("mc", i), mc_samples=64)
    gaps.append(chain_loglik(float(x[0])) - report.total)
    assert all(k >= -1e-10 for k in report.kl_terms)
gaps = np.array(gaps)
print(f"\nlog-likelihood minus ELBO: {gaps.mean():.4f} nats "
      f"(sem {gaps.std(ddof=1)/np.sqrt(len(gaps)):.4f}, must not be negative)")
