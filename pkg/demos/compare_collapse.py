"""Train EdVAE and dVAE side by side on synthetic blobs and compare codebook usage.

Prints the held-out perplexity and mean position entropy at each evaluation.
The defaults finish in a few minutes on one core; ``--iterations 5000``
matches the desk-scale configs in demos/configs.

    python demos/compare_collapse.py --iterations 1000 --seed 0
"""

import argparse

from edvae.data import SynthSpec, generate_synth
from edvae.training import TrainConfig, train

BETA_MAX = {"edvae": 5e-7, "dvae": 5e-5}


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--iterations", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--eval-every", type=int, default=250)
    args = p.parse_args()

    spec = SynthSpec(kind="blobs", extent=32, clusters=4, size=1024)
    train_ds, eval_ds = generate_synth(spec), generate_synth(spec, "test", 128)
    results = {}
    for model, beta in BETA_MAX.items():
        cfg = TrainConfig(beta_max=beta, model=model, iterations=args.iterations, batch_size=4, seed=args.seed,
                          codebook_size=64, embedding_dim=8, base_channels=16, res_blocks_per_stage=1)
        print(f"training {model} ...", flush=True)
        results[model] = train(cfg, train_ds, eval_ds, eval_every=args.eval_every, eval_size=128)

    print(f"{'iter':>6} {'ppl edvae':>10} {'ppl dvae':>10} {'H edvae':>9} {'H dvae':>9}")
    for ev_e, ev_d in zip(results["edvae"].evals, results["dvae"].evals):
        print(f"{ev_e['iter']:>6} {ev_e['perplexity']:>10.3f} {ev_d['perplexity']:>10.3f} "
              f"{ev_e['mean_entropy']:>9.4f} {ev_d['mean_entropy']:>9.4f}")
    for model, res in results.items():
        ev = res.final_eval
        print(f"{model}: perplexity {ev['perplexity']:.3f}, mse x1e3 {ev['mse_x1e3']:.2f}, diverged {res.diverged}")


if __name__ == "__main__":
    main()
