"""Deterministic SVG figures for the report command."""
import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

_RC = {"svg.hashsalt": "shapetime", "svg.fonttype": "none", "font.size": 9}


def _save(fig, path):
    fig.savefig(path, format="svg", metadata={"Date": None, "Creator": None})
    plt.close(fig)


def time_scatter(path, t, tau_hat, tau_gt, band_t, band_sigma, title=""):
    """Chronological ``t`` against estimated time, with the model's +-2 sigma band."""
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(4.5, 4))
        ax.scatter(t, tau_gt, s=3, c="tab:blue", alpha=0.4, label="ground truth", linewidths=0)
        ax.scatter(t, tau_hat, s=3, c="tab:red", alpha=0.4, label="estimate", linewidths=0)
        ax.fill_between(band_t, band_t - 2 * band_sigma, band_t + 2 * band_sigma,
                        color="tab:red", alpha=0.15, label="model $\\pm 2\\sigma$")
        ax.set_xlabel("chronological time t")
        ax.set_ylabel("intrinsic time")
        ax.set_title(title)
        ax.legend(loc="upper left", fontsize=7)
        _save(fig, path)


def sigma_bands(path, t, curves, title=""):
    """Ground-truth vs estimated ``t +- 2 sigma`` bands, one panel per named location.

    ``curves`` maps a label to ``(sigma_true, sigma_est)`` arrays over ``t``.
    """
    with plt.rc_context(_RC):
        n = len(curves)
        fig, axes = plt.subplots(1, n, figsize=(3 * n, 3), squeeze=False)
        for ax, (label, (s_true, s_est)) in zip(axes[0], curves.items()):
            ax.fill_between(t, t - 2 * s_true, t + 2 * s_true, color="tab:blue", alpha=0.3,
                            label="ground truth")
            ax.fill_between(t, t - 2 * s_est, t + 2 * s_est, color="tab:red", alpha=0.3,
                            label="model")
            ax.plot(t, t, c="k", lw=0.8)
            ax.set_title(label)
            ax.set_xlabel("t")
        axes[0][0].set_ylabel("intrinsic time")
        axes[0][0].legend(loc="upper left", fontsize=7)
        fig.suptitle(title)
        fig.tight_layout()
        _save(fig, path)

