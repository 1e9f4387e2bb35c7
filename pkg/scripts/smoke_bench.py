from posefield.services.synth_service import synth_service

TRIALS = 500


def run() -> None:
    bicubic = synth_service.bench_upsample_error(32, "bicubic", TRIALS, 0)
    rie = synth_service.bench_upsample_error(32, "rie", TRIALS, 0)
    print(f"bench f_d=32 bicubic mean={bicubic.mean_px:.3f}px rie mean={rie.mean_px:.4f}px")

    assert 1.5 <= bicubic.mean_px <= 4.0, bicubic
    assert rie.mean_px <= 0.01, rie
    assert rie.mean_px < bicubic.mean_px

    again = synth_service.bench_upsample_error(32, "bicubic", TRIALS, 0, jobs=2)
    assert again.mean_px == bicubic.mean_px, (again, bicubic)


if __name__ == "__main__":
    run()
