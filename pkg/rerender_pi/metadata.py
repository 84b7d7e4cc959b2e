"""Abstract classes for handling named parameter bags.

Every configuration group (model, training, degradation, dataset) and every
record of the dataset manifest inherits from one of these classes.
"""

from abc import ABC
import json
import warnings


class MetaData(ABC):
    def __init__(self, name):
        """Construct a parameter bag and give it a name.

        Parameters
        ----------
        name : str
            A descriptive name, e.g. 'model', 'train' or a subject id.
        """
        self.__name = name
        self.__required_parameters = []
        self._metadata = {}

    @property
    def name(self):
        """Name that identifies the bag (a parameter group or a subject).

        Returns
        -------
        str
        """
        return self.__name

    @name.setter
    def name(self, name):
        self.__name = name

    def set_requirements(self, list_of_requirements: list):
        """Defines the parameters this bag is expected to hold. Used to check
        for missing parameters before a stage starts.

        Parameters
        ----------
        list_of_requirements : list
            names of the required parameters
        """
        self.__required_parameters = list(list_of_requirements)

    def get_requirements(self):
        """Gets the list of required parameters.

        Returns
        -------
        list
        """
        return self.__required_parameters

    def set(self, key=None, value=None, **kwargs):
        """Sets one or more parameters. Parameters that are not required are
        stored anyway, with a warning.

        Parameters
        ----------
        key : str, optional
            parameter name, by default None
        value : any, optional
            parameter value, by default None
        """
        if key is not None:
            kwargs = dict({key: value}, **kwargs)
        for key, value in kwargs.items():
            if key not in self.__required_parameters and key != "name":
                warnings.warn("{} is not a required parameter of {}: setting anyway".format(key, self.name))
            self._metadata[key] = value

    def get(self, key):
        """Get the value of a parameter.

        Parameters
        ----------
        key : str

        Returns
        -------
        any

        Raises
        ------
        KeyError
            if the parameter was never set.
        """
        if key not in self._metadata:
            raise KeyError("{} has no parameter {}".format(self.name, key))
        return self._metadata[key]

    def set_from_dictionary(self, data: dict):
        """Same as ``set`` but takes a dictionary.

        Parameters
        ----------
        data : dict
        """
        self.set(**data)

    def get_as_dictionary(self):
        """Returns a copy of all parameters.

        Returns
        -------
        dict
        """
        return dict(self._metadata)

    def get_missing_keys(self):
        """Gets the required parameters that have not been set.

        Returns
        -------
        list
        """
        return [required for required in self.__required_parameters if required not in self._metadata]


class MultiMetaData(ABC):
    """An ordered collection of MetaData objects, addressable by name or by
    position."""

    record_class = MetaData

    def __init__(self):
        self._metadata_list = []
        self.__names = []

    @property
    def names(self):
        """Names of the records in insertion order.

        Returns
        -------
        list

        Raises
        ------
        IndexError
            if no records have been added.
        """
        if not self._metadata_list:
            raise IndexError('Must add records before retrieving names')
        return list(self.__names)

    def add_metadata(self, metadata: MetaData):
        """Appends a record.

        Parameters
        ----------
        metadata : MetaData
        """
        if metadata.name in self.__names:
            raise ValueError('{} is already in the collection'.format(metadata.name))
        self._metadata_list.append(metadata)
        self.__names.append(metadata.name)

    def name_to_id(self, name):
        """Converts a record name to its position.

        Parameters
        ----------
        name : str

        Returns
        -------
        int

        Raises
        ------
        IndexError
            if the name is unknown.
        """
        if name not in self.__names:
            raise IndexError('{} is not a valid name.'.format(name))
        return self.__names.index(name)

    def id_to_name(self, id):
        return self.__names[id]

    def __getitem__(self, item):
        if isinstance(item, str):
            item = self.name_to_id(item)
        return self._metadata_list[item]

    def __len__(self):
        return len(self._metadata_list)

    def __iter__(self):
        return iter(self._metadata_list)

    def get_as_single_dataset(self):
        """All records as one dictionary keyed by name."""
        return {metadata.name: metadata.get_as_dictionary() for metadata in self._metadata_list}

    def write_to_json(self, filename):
        """Writes the collection to json. Records keep their order; keys inside
        a record are sorted so that two identical collections produce identical
        files.

        Parameters
        ----------
        filename : str
        """
        data = {name: dict(sorted(record.items())) for name, record in self.get_as_single_dataset().items()}
        with open(filename, 'w', encoding='utf-8') as handle:
            json.dump(data, handle, indent=1)

    def make_record(self, name):
        """Creates an empty record for ``name`` when reading from json."""
        return self.record_class(name=name)

    def read_from_json(self, filename):
        """Reads a collection from json, replacing any records already held.

        Parameters
        ----------
        filename : str
        """
        self._metadata_list = []
        self.__names = []
        with open(filename, 'r', encoding='utf-8') as handle:
            data = json.load(handle)
        for name, metadata in data.items():
            record = self.make_record(name)
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                record.set_from_dictionary(metadata)
            self.add_metadata(record)
