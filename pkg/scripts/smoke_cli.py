import json
import tempfile
from pathlib import Path

from posefield.main import main


def run() -> None:
    with tempfile.TemporaryDirectory(prefix="posefield-cli-") as tmp:
        root = Path(tmp)
        ann = root / "ann.json"
        fields = root / "fields"
        dets = root / "dets.json"
        report = root / "report.json"
        metrics = root / "metrics.prom"

        steps = [
            ["synth", "--seed", "11", "--images", "3", "--image-size", "256x256", "--out", str(ann)],
            ["encode", "--ann", str(ann), "--out", str(fields)],
            ["decode", "--fields", str(fields), "--out", str(dets)],
            ["eval", "--ann", str(ann), "--detections", str(dets), "--out", str(report)],
            ["viz", "--ann", str(ann), "--detections", str(dets), "--fields", str(fields), "--out", str(root / "svg")],
        ]
        for argv in steps:
            code = main(["--jobs", "2", "--metrics", str(metrics), *argv])
            assert code == 0, (argv[0], code)

        summary = json.loads(report.read_text(encoding="utf-8"))
        assert abs(summary["AP"] - 1.0) < 1e-9, summary
        assert len(list((root / "svg").glob("*.svg"))) == 3

        target = fields / "000001"
        loss_out = root / "loss.json"
        assert main(["loss", "--pred", str(target), "--target", str(target), "--out", str(loss_out)]) == 0
        assert json.loads(loss_out.read_text(encoding="utf-8"))["total"] == 0.0

        assert main(["encode", "--ann", str(ann), "--fd", "7", "--out", str(root / "bad")]) == 2
        assert main(["encode", "--ann", str(root / "missing.json"), "--out", str(root / "bad")]) == 3
        assert "posefield_cli_encode_total" in metrics.read_text(encoding="utf-8")


if __name__ == "__main__":
    run()
