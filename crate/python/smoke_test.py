"""Smoke test for the compiled extension.

Build it with `cargo build --release -p radgen-python`, then either put the
shared library on PYTHONPATH as radgen.so or pass its directory:

    python python/smoke_test.py target/release
"""

import importlib.util
import os
import shutil
import sys
import tempfile


def load(libdir):
    for name in ("libradgen_py.so", "libradgen_py.dylib", "radgen_py.dll"):
        src = os.path.join(libdir, name)
        if os.path.exists(src):
            break
    else:
        sys.exit(f"no compiled extension in {libdir}")
    tmp = tempfile.mkdtemp()
    dst = os.path.join(tmp, "radgen.pyd" if name.endswith(".dll") else "radgen.so")
    shutil.copy(src, dst)
    loader_spec = importlib.util.spec_from_file_location("radgen", dst)
    mod = importlib.util.module_from_spec(loader_spec)
    loader_spec.loader.exec_module(mod)
    return mod


def main():
    if len(sys.argv) > 1:
        rg = load(sys.argv[1])
    else:
        import radgen as rg

    assert rg.split_sizes(57805) == (40463, 5780, 11562)
    assert rg.normalize("The Cat, sat.") == ["the", "cat", ",", "sat", "."]
    assert len(rg.label_names()) == 14
    assert rg.extract_labels("small pneumothorax at the right apex . there is no pleural effusion .") == [
        "pneumothorax"
    ]

    m = rg.evaluate(["the cat sat", "a b"], ["the cat sat on the mat", "a b"])
    assert m["n"] == 2
    same = rg.evaluate(["a b c d", "e f g h"], ["a b c d", "e f g h"])
    assert abs(same["b4"] - 1.0) < 1e-12, same
    assert abs(same["rouge_l"] - 1.0) < 1e-12, same

    s = rg.synth_sample(0, 3, size=16)
    assert s["shape"] == (16, 16, 3)
    assert len(s["pixels"]) == 16 * 16 * 3
    assert all(0.0 <= p <= 1.0 for p in s["pixels"])
    assert sorted(rg.extract_labels(s["report"])) == sorted(s["labels"])

    try:
        rg.evaluate(["a"], [])
    except ValueError:
        pass
    else:
        raise AssertionError("misaligned corpus accepted")

    print(f"radgen {rg.__version__}: smoke test ok")


if __name__ == "__main__":
    main()
