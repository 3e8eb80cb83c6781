from contextlib import contextmanager
from inspect import ismodule
from typing import Any, Iterator, Optional

import os

from sqlalchemy import VARCHAR, TypeDecorator, create_engine, inspect
from sqlalchemy.engine import Engine
from sqlalchemy.orm import Session, sessionmaker

from cosub.utils import KeyMapper


class EnumCast(TypeDecorator):
    """Stores an Enum member by its string value."""
    impl = VARCHAR
    cache_ok = True

    def __init__(self, enum_cls, *args, **kw) -> None:
        TypeDecorator.__init__(self, *args, **kw)
        self.mapper = KeyMapper(enum_cls)

    def process_bind_param(self, value, dialect):
        return self.mapper.to_key(value)

    def process_result_value(self, value, dialect):
        return self.mapper.to_value(value)


class Dbf:
    """Lazily created SQLite engine and session factory for one file."""
    def __init__(self, meta, path) -> None:
        if ismodule(meta):
            meta = meta.Base.metadata
        self.path = str(path)
        self.meta = meta
        self._engine: Optional[Engine] = None
        self._Session: Optional[sessionmaker] = None

    def engine(self) -> Engine:
        if self._engine is None:
            self._engine = create_engine('sqlite:///%s' % self.path)
        return self._engine

    def exists(self) -> bool:
        return os.path.exists(self.path)

    def ensure_db(self) -> None:
        self.meta.create_all(self.engine())

    def table_names(self):
        return sorted(inspect(self.engine()).get_table_names())

    def session(self) -> Session:
        if self._Session is None:
            self._Session = sessionmaker(bind=self.engine(),
                                         expire_on_commit=False)
        return self._Session()

    @contextmanager
    def session_scope(self) -> Iterator[Session]:
        session = self.session()
        try:
            yield session
            session.commit()
        except BaseException:
            session.rollback()
            raise
        finally:
            session.close()

    def dispose(self) -> Any:
        if self._engine is not None:
            self._engine.dispose()
            self._engine = None
            self._Session = None
