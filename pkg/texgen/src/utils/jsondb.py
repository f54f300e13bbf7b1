
from typing import Dict, Optional, Generic, Type, TypeVar, ClassVar

import json, os, pydantic, aiofiles, asyncio, threading

DataModel = TypeVar("DataModel", bound=pydantic.BaseModel)

class JsonDB(Generic[DataModel]):
    """
    JSON file holding one pydantic model (run registry, fixture manifest).
    XXX : Locks are per process, not file locks, so two processes writing the same registry can race.

    Usage:
        async with JsonDB(path, RunRegistry) as registry:
            registry.runs.append(entry)   # saved on exit
    """
    # NOTE : Thread locks, not asyncio locks: training and fixture writers each run their own
    # event loop (asyncio.run inside worker threads), and an asyncio.Lock is bound to one loop.
    file_locks: ClassVar[Dict[str, threading.Lock]] = {}
    _registry_lock: ClassVar[threading.Lock] = threading.Lock()

    def __init__(self, path: str, model: Type[DataModel]):
        self.path = path
        self.model: Type[DataModel] = model
        self.data: Optional[DataModel] = None

    @classmethod
    def lock_for(cls, path: str) -> threading.Lock:
        key = os.path.abspath(path) + ".lock"
        with cls._registry_lock:
            return cls.file_locks.setdefault(key, threading.Lock())

    async def __aenter__(self) -> DataModel:
        """
        Lock the file and load it (or a fresh model instance when it does not exist yet).
        """
        dirpath = os.path.dirname(self.path)
        if dirpath:
            await asyncio.to_thread(os.makedirs, dirpath, exist_ok=True)

        lock = self.lock_for(self.path)
        # Wait off the event loop so other coroutines keep running
        await asyncio.to_thread(lock.acquire)

        try:
            self.data = await self.read()
        except BaseException:
            lock.release()
            raise

        return self.data  # Mutable, intended to be mutated within the async block

    async def __aexit__(self, exc_type, exc_val, exc_tb):
        """
        Save unless the block raised, then release the lock.
        """
        try:
            if self.data is not None and exc_type is None:
                await self.write(self.data)
        finally:
            self.data = None
            self.lock_for(self.path).release()

    async def write(self, data: DataModel) -> None:
        # Stable formatting: identical models give identical bytes
        payload = await asyncio.to_thread(data.model_dump, mode="json")
        content = await asyncio.to_thread(json.dumps, payload, indent=4, ensure_ascii=False)

        async with aiofiles.open(self.path, "w", encoding="utf-8") as f:
            await f.write(content + "\n")

    async def read(self) -> DataModel:
        """
        Read the JSON file and return an instance of the data model.
        """
        exists = await asyncio.to_thread(os.path.exists, self.path)
        if exists:
            async with aiofiles.open(self.path, "r", encoding="utf-8") as f:
                content = await f.read()
            # Parse JSON off the event loop (CPU-bound)
            return await asyncio.to_thread(self.model.model_validate_json, content)
        else:
            return self.model()
