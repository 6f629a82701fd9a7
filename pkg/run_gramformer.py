"""
Direct Gramformer runner - works from a source checkout without installing
"""
import sys
import os

# Get the absolute path to the project directory
project_dir = os.path.dirname(os.path.abspath(__file__))
sys.path.insert(0, project_dir)

# Test the imports step by step
try:
    from crowd_gramformer import numerics
    print("✅ numerics imported")

    from crowd_gramformer import graphs
    print("✅ graphs imported")

    from crowd_gramformer import model
    print("✅ model imported")

    from crowd_gramformer import synthdata, diagnostics
    print("✅ synthdata / diagnostics imported")

    from crowd_gramformer.cli import main

except ImportError as e:
    print(f"❌ Import failed: {e}")
    package_dir = os.path.join(project_dir, "crowd_gramformer")
    if os.path.exists(package_dir):
        print(f"Files in crowd_gramformer: {sorted(os.listdir(package_dir))}")
    else:
        print(f"❌ crowd_gramformer directory NOT found at: {package_dir}")
    sys.exit(1)


if __name__ == "__main__":
    sys.exit(main(sys.argv[1:]))
