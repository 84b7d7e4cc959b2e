"""Unit tests and regression for MetaData classes
"""

import pytest
from rerender_pi.dataset import DatasetInfo, DatasetManifest, SubjectRecord
from rerender_pi.metadata import MetaData, MultiMetaData


def test_metadata():
    metadata = MetaData(name="test")
    metadata.set_requirements(["param1", "param2"])
    assert metadata.get_missing_keys() == ["param1", "param2"]

    metadata.set(param1="string", param2=0.)
    assert not metadata.get_missing_keys()

    with pytest.warns(Warning):
        metadata.set_from_dictionary(data={"bad_parameter": "bad"})

    with pytest.warns(Warning):
        metadata.set("bad_parameter", "bad")

    assert metadata.get_as_dictionary() == {"param1": "string", "param2": 0., "bad_parameter": "bad"}

    with pytest.raises(KeyError):
        metadata.get("never_set")


def test_multi_metadata(tmpdir):
    multi = MultiMetaData()

    metadata = MetaData(name="test1")
    metadata.set_requirements(["param1", "param2"])

    with pytest.raises(IndexError):
        multi.names
    with pytest.raises(IndexError):
        multi.name_to_id("random name")

    multi.add_metadata(metadata)
    assert multi.names
    assert multi.name_to_id("test1") == 0
    assert multi.id_to_name(0) == "test1"
    with pytest.raises(ValueError):
        multi.add_metadata(MetaData(name="test1"))

    multi.write_to_json("{}/state.json".format(tmpdir))
    old_multi = multi
    multi = MultiMetaData()
    multi.read_from_json("{}/state.json".format(tmpdir))

    assert old_multi.get_as_single_dataset() == multi.get_as_single_dataset()


def test_manifest_records(tmpdir):
    """Records read back from json keep their classes and their order."""
    manifest = DatasetManifest()
    info = DatasetInfo()
    info.set(generator_version=1, global_seed=0, height=64, width=32, degrade={'noise_sigma': 0.})
    manifest.add_metadata(info)
    for index, split in enumerate(('train', 'heldout')):
        record = SubjectRecord('subj{}'.format(index))
        record.set(split=split, seed=index, frames=3, views=2, ref_poses=1, checksums={})
        manifest.add_metadata(record)

    manifest.write_to_json("{}/manifest.json".format(tmpdir))
    loaded = DatasetManifest()
    loaded.read_from_json("{}/manifest.json".format(tmpdir))

    assert isinstance(loaded.info, DatasetInfo)
    assert [record.name for record in loaded.subjects()] == ['subj0', 'subj1']
    assert [record.name for record in loaded.subjects('heldout')] == ['subj1']
    assert loaded.frame_keys('train', views=[1]) == [('subj0', 0, 1), ('subj0', 1, 1), ('subj0', 2, 1)]
    assert loaded.reference_keys('subj1') == [(0, 0), (0, 1)]
